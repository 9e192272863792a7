//! Contribution: sign cards exported by a neighbour system and forward them
//! to the concerned person.

use crate::barker::{self, PayloadRef, Subject};
use crate::card::{self, CardId, CardPayload, DigitalCard};
use crate::identity::AccountId;
use crate::node::{Error, Node};
use crate::store::StoreError;
use crate::transfer::{Command, DeliveryReceipt};

impl Node {
    /// Allocates the next provider-side discriminator of `account`.
    pub fn next_discriminator(&self, account: &AccountId) -> Result<String, Error> {
        Ok(self.store().write(account, |txn| Ok::<_, StoreError>(txn.issue_discriminator()))?)
    }

    /// `forwardToCP`: signs an unsigned card as its provider and sends it to
    /// the concerned person for repatriation.
    pub fn contribute(&self, account: &AccountId, card: DigitalCard) -> Result<DeliveryReceipt, Error> {
        if !self.store().contains(account) {
            return Err(StoreError::UnknownAccount(account.clone()).into());
        }
        if &card.id.provider != account {
            return Err(Error::WrongProvider {
                provider: card.id.provider.clone(),
                account: account.clone(),
            });
        }
        card.validate(self.max_body())?;
        let key = self.sign_key(account)?;
        let signed = card::contributor_sign(&card, &key)?;
        let concerned = signed.id.concerned.clone();
        let card_id = signed.id.clone();
        let receipt = self
            .transfer()
            .send_command(account, &concerned, &Command::RepatriateCard(signed))?;
        self.store().write(account, |txn| {
            barker::add_notification(
                txn,
                Subject::Repatriation,
                PayloadRef::Card(card_id.clone()),
                format!("card {} contributed to {concerned}", card_id.discriminator),
            );
            Ok::<_, StoreError>(())
        })?;
        Ok(receipt)
    }

    /// Contributes a new card, allocating the discriminator when none is given.
    pub fn contribute_payload(
        &self,
        account: &AccountId,
        concerned: AccountId,
        payload: CardPayload,
        discriminator: Option<String>,
    ) -> Result<(CardId, DeliveryReceipt), Error> {
        let discriminator = match discriminator {
            Some(d) => d,
            None => self.next_discriminator(account)?,
        };
        let id = CardId::new(discriminator, account.clone(), concerned)?;
        let receipt = self.contribute(account, DigitalCard::new(id.clone(), payload))?;
        Ok((id, receipt))
    }
}
